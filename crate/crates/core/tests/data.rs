use std::path::Path;

use faenet::data::{
    augment, generate, generate_sample, hflip, load_annotations, load_dataset, load_image, save_image, write_dataset,
    AugmentOptions, Sample, ShapeKind, SynthSpec,
};
use faenet::match_loss::BBox;
use faenet::{Error, Tensor};

fn spec(seed: u64, n: usize) -> SynthSpec {
    SynthSpec { seed, num_images: n, image_size: 64, ..Default::default() }
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let area = |x: &BBox| (x.xmax - x.xmin) * (x.ymax - x.ymin);
    inter / (area(a) + area(b) - inter)
}

#[test]
fn generation_is_deterministic_and_per_index() {
    let a = generate(&spec(11, 6)).unwrap();
    let b = generate(&spec(11, 6)).unwrap();
    assert_eq!(a, b);
    for (i, s) in a.iter().enumerate() {
        assert_eq!(*s, generate_sample(&spec(11, 6), i).unwrap());
        assert_eq!(s.image.shape(), &[1, 64, 64]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let c = generate(&spec(12, 6)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn single_object_range_gives_one_annotation() {
    let s = SynthSpec { objects: (1, 1), ..spec(3, 40) };
    for sample in generate(&s).unwrap() {
        assert_eq!(sample.annotations.len(), 1);
    }
}

#[test]
fn overlap_limit_holds_over_exhaustive_pair_scan() {
    let s = SynthSpec { objects: (2, 6), size: (0.15, 0.45), max_overlap: 0.1, ..spec(5, 100) };
    let samples = generate(&s).unwrap();
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for sample in &samples {
        let a = &sample.annotations;
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                worst = worst.max(overlap(&a[i].bbox, &a[j].bbox));
                pairs += 1;
            }
        }
    }
    assert!(pairs > 100, "only {pairs} pairs");
    assert!(worst <= 0.1, "max IoU {worst}");
}

#[test]
fn annotations_tightly_bound_rendered_pixels() {
    let s = SynthSpec { objects: (1, 1), noise: 0.0, ..spec(8, 60) };
    let n = s.image_size;
    let mut kinds = std::collections::BTreeSet::new();
    for sample in generate(&s).unwrap() {
        let gt = sample.annotations[0];
        kinds.insert(gt.class_id);
        let (mut c0, mut r0, mut c1, mut r1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..n {
            for c in 0..n {
                if sample.image.data()[r * n + c] != 0.2 {
                    c0 = c0.min(c);
                    r0 = r0.min(r);
                    c1 = c1.max(c + 1);
                    r1 = r1.max(r + 1);
                }
            }
        }
        let px = gt.bbox.scaled(n as f64, n as f64);
        for (got, want) in [(c0 as f64, px.xmin), (r0 as f64, px.ymin), (c1 as f64, px.xmax), (r1 as f64, px.ymax)] {
            assert!((got - want).abs() <= 1.0, "pixel edge {got} vs stored {want}");
        }
    }
    assert_eq!(kinds.len(), 3);
}

#[test]
fn classes_have_distinct_fill_levels() {
    let s = SynthSpec { objects: (1, 1), noise: 0.0, size: (0.4, 0.5), ..spec(2, 60) };
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for sample in generate(&s).unwrap() {
        let gt = sample.annotations[0];
        let (cx, cy) = gt.bbox.center();
        let (c, r) = ((cx * 64.0) as usize, (cy * 64.0) as usize);
        means[gt.class_id - 1].push(sample.image.data()[r * 64 + c]);
    }
    let avg: Vec<f64> = means.iter().map(|m| m.iter().sum::<f64>() / m.len() as f64).collect();
    assert!(avg[0] < avg[1] && avg[1] < avg[2], "{avg:?}");
}

#[test]
fn invalid_specs_are_rejected() {
    for bad in [
        SynthSpec { size: (0.0, 0.5), ..spec(0, 1) },
        SynthSpec { size: (0.2, 1.0), ..spec(0, 1) },
        SynthSpec { max_overlap: 1.0, ..spec(0, 1) },
        SynthSpec { objects: (0, 2), ..spec(0, 1) },
        SynthSpec { classes: vec![ShapeKind::Ellipse, ShapeKind::Ellipse], ..spec(0, 1) },
    ] {
        assert!(matches!(generate(&bad), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn manifest_round_trip_preserves_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(21, 12);
    let samples = generate(&s).unwrap();
    let path = write_dataset(dir.path(), &s.class_names(), &samples).unwrap();
    let (classes, descs) = load_annotations(&path).unwrap();
    assert_eq!(classes, s.class_names());
    assert_eq!(descs.len(), samples.len());
    for (d, s) in descs.iter().zip(&samples) {
        assert_eq!(d.annotations, s.annotations);
    }
    let (_, loaded) = load_dataset(&path).unwrap();
    for (l, s) in loaded.iter().zip(&samples) {
        assert!(l.image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn rgb_images_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = SynthSpec { channels: 3, ..spec(4, 1) };
    let sample = &generate(&s).unwrap()[0];
    let path = dir.path().join("x.ppm");
    save_image(&path, &sample.image).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back.shape(), &[3, 64, 64]);
    assert!(back.max_abs_diff(&sample.image) <= 0.5 / 255.0 + 1e-12);
}

fn write_manifest(dir: &Path, body: &str) -> std::path::PathBuf {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    save_image(&dir.join("images/a.pgm"), &Tensor::zeros(vec![1, 8, 8])).unwrap();
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, body).unwrap();
    path
}

const HEADER: &str = r#"{"format":"faenet-manifest","version":1,"classes":["rectangle","ellipse"]}"#;

#[test]
fn malformed_records_are_reported_with_positions() {
    let dir = tempfile::tempdir().unwrap();
    let ok = r#"{"image":"images/a.pgm","width":8,"height":8,"objects":[{"class":"ellipse","xmin":1,"ymin":1,"xmax":4,"ymax":5}]}"#;
    let cases = [
        (r#"{"image":"images/a.pgm","width":8,"height":8,"objects":[{"class":"ellipse","xmin":5,"ymin":1,"xmax":5,"ymax":5}]}"#, "record 1 (images/a.pgm): object 0 is inverted"),
        (r#"{"image":"images/missing.pgm","width":8,"height":8,"objects":[]}"#, "missing image file"),
        (r#"{"image":"images/a.pgm","width":8,"height":8,"objects":[{"class":"star","xmin":1,"ymin":1,"xmax":4,"ymax":5}]}"#, "unknown class \"star\""),
    ];
    for (bad, needle) in cases {
        let path = write_manifest(dir.path(), &format!("{HEADER}\n{ok}\n{bad}\n"));
        match load_annotations(&path) {
            Err(Error::Manifest { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains(needle), "{msg}");
            }
            other => panic!("expected a manifest error, got {other:?}"),
        }
    }
}

#[test]
fn fixture_counts_match_line_oracle() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/shapes/manifest.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let expected_records = lines.len() - 1;
    let expected_objects: Vec<usize> = lines[1..].iter().map(|l| l.matches("\"class\"").count()).collect();
    let expected_difficult = text.matches("\"difficult\": true").count();

    let (classes, descs) = load_annotations(&path).unwrap();
    assert_eq!(classes.len(), 3);
    assert_eq!(descs.len(), expected_records);
    assert_eq!(expected_records, 10);
    let got: Vec<usize> = descs.iter().map(|d| d.annotations.len()).collect();
    assert_eq!(got, expected_objects);
    assert_eq!(descs.iter().flat_map(|d| &d.annotations).filter(|g| g.difficult).count(), expected_difficult);
    let first = descs.iter().find(|d| !d.annotations.is_empty()).unwrap();
    assert_eq!(first.annotations[0].bbox, BBox { xmin: 15.0 / 64.0, ymin: 18.0 / 48.0, xmax: 23.0 / 64.0, ymax: 27.0 / 48.0 });
}

fn sample_with_boxes() -> Sample {
    generate(&SynthSpec { objects: (3, 3), ..spec(31, 1) }).unwrap().remove(0)
}

#[test]
fn double_flip_restores_boxes_and_pixels() {
    let s = sample_with_boxes();
    let twice = hflip(&hflip(&s));
    assert_eq!(twice.image, s.image);
    for (a, b) in twice.annotations.iter().zip(&s.annotations) {
        assert_eq!(a.class_id, b.class_id);
        for (x, y) in [(a.bbox.xmin, b.bbox.xmin), (a.bbox.xmax, b.bbox.xmax), (a.bbox.ymin, b.bbox.ymin)] {
            assert!((x - y).abs() <= f64::EPSILON, "{x} vs {y}");
        }
    }
}

#[test]
fn flip_reflects_coordinates() {
    let s = sample_with_boxes();
    let f = hflip(&s);
    for (a, b) in f.annotations.iter().zip(&s.annotations) {
        assert_eq!(a.bbox.xmin, 1.0 - b.bbox.xmax);
        assert_eq!(a.bbox.xmax, 1.0 - b.bbox.xmin);
        assert_eq!((a.bbox.ymin, a.bbox.ymax), (b.bbox.ymin, b.bbox.ymax));
    }
    let w = s.width();
    assert_eq!(f.image.data()[0], s.image.data()[w - 1]);
}

#[test]
fn forced_flip_through_augment_matches_hflip() {
    let s = sample_with_boxes();
    let opts = AugmentOptions { flip_prob: 1.0, expand_prob: 0.0, crop_prob: 0.0, brightness: 0.0, contrast: 0.0, ..Default::default() };
    let a = augment(&s, 9, &opts).unwrap();
    let f = hflip(&s);
    assert_eq!(a.annotations, f.annotations);
    assert!(a.image.max_abs_diff(&f.image) < 1e-12);
}

#[test]
fn augmentation_keeps_objects_and_validity() {
    let samples = generate(&SynthSpec { objects: (1, 4), ..spec(41, 30) }).unwrap();
    let opts = AugmentOptions { expand_prob: 0.7, crop_prob: 1.0, ..Default::default() };
    for (i, s) in samples.iter().enumerate() {
        for k in 0..10u64 {
            let seed = i as u64 * 100 + k;
            let a = augment(s, seed, &opts).unwrap();
            assert_eq!(a, augment(s, seed, &opts).unwrap());
            assert_eq!(a.image.shape(), s.image.shape());
            assert!(!a.annotations.is_empty());
            for g in &a.annotations {
                assert!(s.annotations.iter().any(|o| o.class_id == g.class_id));
                assert!(g.bbox.xmin >= 0.0 && g.bbox.xmax <= 1.0 && g.bbox.xmin < g.bbox.xmax);
                assert!(g.bbox.ymin >= 0.0 && g.bbox.ymax <= 1.0 && g.bbox.ymin < g.bbox.ymax);
            }
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn expansion_shrinks_boxes_consistently() {
    let s = generate(&SynthSpec { objects: (1, 1), noise: 0.0, ..spec(6, 1) }).unwrap().remove(0);
    let opts = AugmentOptions { flip_prob: 0.0, expand_prob: 1.0, crop_prob: 0.0, brightness: 0.0, contrast: 0.0, ..Default::default() };
    let a = augment(&s, 3, &opts).unwrap();
    let (g0, g1) = (s.annotations[0].bbox, a.annotations[0].bbox);
    let ratio_w = g1.width() / g0.width();
    let ratio_h = g1.height() / g0.height();
    assert!((ratio_w - ratio_h).abs() < 1e-12 && (0.5..=1.0).contains(&ratio_w));
    let n = 64.0;
    let (cx, cy) = g1.center();
    let v = a.image.data()[(cy * n) as usize * 64 + (cx * n) as usize];
    let (ox, oy) = g0.center();
    let orig = s.image.data()[(oy * n) as usize * 64 + (ox * n) as usize];
    assert!((v - orig).abs() < 0.05, "{v} vs {orig}");
}
