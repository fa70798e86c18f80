//! Box coding, matching and the multibox loss against brute-force references.

use faenet::detector::{HeadOutput, PriorBox};
use faenet::match_loss::{
    decode, encode, iou, match_priors, multibox_loss, BBox, GroundTruth, MatchResult, Variances, IOU_THRESHOLD,
};
use faenet::rng::substream;
use faenet::tensor::gradcheck::{grad_check, GradCheckOptions};
use faenet::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

mod common;
use common::reference_match;

fn prior(cx: f64, cy: f64, w: f64, h: f64) -> PriorBox {
    PriorBox { cx, cy, w, h, level: 0, cell: (0, 0) }
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(0.05..0.6);
    let h = rng.random_range(0.05..0.6);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn random_prior(rng: &mut impl Rng) -> PriorBox {
    let b = random_box(rng);
    let (cx, cy) = b.center();
    prior(cx, cy, b.width(), b.height())
}

#[test]
fn iou_examples() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
    assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    let far = BBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
    assert_eq!(iou(&a, &far).unwrap(), 0.0);
    let touching = BBox::new(2.0, 0.0, 3.0, 2.0).unwrap();
    assert_eq!(iou(&a, &touching).unwrap(), 0.0);
    let flat = BBox { xmin: 0.0, ymin: 0.0, xmax: 1.0, ymax: 0.0 };
    assert!(iou(&a, &flat).is_err());
    assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
}

#[test]
fn encode_examples_and_round_trip() {
    let v = Variances::default();
    let p = prior(0.5, 0.5, 0.2, 0.2);
    let same = BBox::from(&p);
    assert!(encode(&same, &p, v).unwrap().iter().all(|o| o.abs() < 1e-12));
    let b = BBox::from_center(0.5, 0.5, 0.4, 0.4);
    let o = encode(&b, &p, v).unwrap();
    let l = 2f64.ln() / 0.2;
    assert!(o[0].abs() < 1e-15 && o[1].abs() < 1e-15);
    assert!((o[2] - l).abs() < 1e-12 && (o[3] - l).abs() < 1e-12);

    let mut rng = substream(1, "encode", &[]);
    for _ in 0..1000 {
        let b = random_box(&mut rng);
        let p = random_prior(&mut rng);
        let d = decode(&encode(&b, &p, v).unwrap(), &p, v);
        for (x, y) in [(d.xmin, b.xmin), (d.ymin, b.ymin), (d.xmax, b.xmax), (d.ymax, b.ymax)] {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let flat = BBox { xmin: 0.1, ymin: 0.1, xmax: 0.1, ymax: 0.3 };
    assert!(encode(&flat, &p, v).is_err());
}

#[test]
fn match_examples() {
    let priors: Vec<PriorBox> = (0..4).map(|i| prior(0.125 + 0.25 * i as f64, 0.5, 0.2, 0.2)).collect();
    let gt = GroundTruth::new(2, BBox::from(&priors[2]), false).unwrap();
    let m = match_priors(&priors, &[gt], IOU_THRESHOLD, Variances::default()).unwrap();
    assert_eq!(m.labels, vec![0, 0, 2, 0]);
    assert!(m.targets[2].iter().all(|o| o.abs() < 1e-12));

    let m = match_priors(&priors, &[], IOU_THRESHOLD, Variances::default()).unwrap();
    assert_eq!(m.num_positives(), 0);

    // two ground truths whose best prior coincides both get a prior
    let a = GroundTruth::new(1, BBox::from_center(0.375, 0.5, 0.2, 0.2), false).unwrap();
    let b = GroundTruth::new(3, BBox::from_center(0.4, 0.5, 0.2, 0.2), false).unwrap();
    let m = match_priors(&priors, &[a, b], IOU_THRESHOLD, Variances::default()).unwrap();
    for j in 0..2 {
        assert!(m.matched_gt.contains(&Some(j)));
    }
    assert!(GroundTruth::new(0, BBox::from_center(0.5, 0.5, 0.1, 0.1), false).is_err());
    assert!(GroundTruth::new(1, BBox::new(0.5, 0.5, 1.2, 0.9).unwrap(), false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn match_agrees_with_reference(seed in any::<u64>(), ngt in 0usize..5) {
        let mut rng = substream(seed, "match", &[]);
        let priors: Vec<PriorBox> = (0..20).map(|_| random_prior(&mut rng)).collect();
        let gts: Vec<GroundTruth> = (0..ngt)
            .map(|j| GroundTruth::new(1 + j % 3, random_box(&mut rng), false).unwrap())
            .collect();
        let m = match_priors(&priors, &gts, IOU_THRESHOLD, Variances::default()).unwrap();
        prop_assert_eq!(&m.matched_gt, &reference_match(&priors, &gts, IOU_THRESHOLD));
        for j in 0..gts.len() {
            prop_assert!(m.matched_gt.contains(&Some(j)));
        }
        for (i, mg) in m.matched_gt.iter().enumerate() {
            match mg {
                Some(j) => prop_assert_eq!(m.labels[i], gts[*j].class_id),
                None => prop_assert_eq!(m.labels[i], 0),
            }
        }
    }
}

// ---- loss -----------------------------------------------------------------

/// Reference multibox loss: explicit softmax probabilities, full sort of
/// background losses, batch-level normalization.
fn reference_loss(loc: &Tensor, conf: &Tensor, matches: &[MatchResult], ratio: usize) -> f64 {
    let [n, p, k] = conf.shape()[..] else { panic!() };
    let mut total = 0.0;
    let mut npos = 0;
    for b in 0..n {
        let prob = |i: usize, c: usize| {
            let row: Vec<f64> = (0..k).map(|j| conf.data()[(b * p + i) * k + j]).collect();
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            (row[c] - m).exp() / z
        };
        let m = &matches[b];
        let mut pos = 0;
        let mut neg = Vec::new();
        for i in 0..p {
            if m.labels[i] == 0 {
                neg.push(-prob(i, 0).ln());
                continue;
            }
            pos += 1;
            total -= prob(i, m.labels[i]).ln();
            for j in 0..4 {
                let d = (loc.data()[(b * p + i) * 4 + j] - m.targets[i][j]).abs();
                total += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
        neg.sort_by(|a, b| b.partial_cmp(a).unwrap());
        total += neg.iter().take(ratio * pos).sum::<f64>();
        npos += pos;
    }
    if npos == 0 {
        0.0
    } else {
        total / npos as f64
    }
}

fn random_case(seed: u64, n: usize, p: usize, k: usize) -> (Tensor, Tensor, Vec<MatchResult>) {
    let mut rng = substream(seed, "loss-case", &[]);
    let loc = Tensor::randn(vec![n, p, 4], 1.0, &mut rng);
    let conf = Tensor::randn(vec![n, p, k], 2.0, &mut rng);
    let matches = (0..n)
        .map(|_| {
            let labels: Vec<usize> =
                (0..p).map(|_| if rng.random_bool(0.2) { rng.random_range(1..k) } else { 0 }).collect();
            let targets = labels
                .iter()
                .map(|&l| if l == 0 { [0.0; 4] } else { std::array::from_fn(|_| rng.random_range(-2.0..2.0)) })
                .collect();
            let matched_gt = labels.iter().map(|&l| (l != 0).then_some(0)).collect();
            MatchResult { labels, targets, matched_gt }
        })
        .collect();
    (loc, conf, matches)
}

fn eval_loss(loc: &Tensor, conf: &Tensor, matches: &[MatchResult]) -> faenet::match_loss::MultiboxLoss {
    let mut g = Graph::new();
    let head = HeadOutput { loc: g.variable(loc.clone()), conf: g.variable(conf.clone()) };
    multibox_loss(&mut g, &head, matches, 3).unwrap()
}

#[test]
fn loss_matches_reference_implementation() {
    for seed in 0..50 {
        let (loc, conf, matches) = random_case(seed, 3, 40, 4);
        let mut g = Graph::new();
        let head = HeadOutput { loc: g.variable(loc.clone()), conf: g.variable(conf.clone()) };
        let out = multibox_loss(&mut g, &head, &matches, 3).unwrap();
        let value = g.value(out.loss).data()[0];
        let expect = reference_loss(&loc, &conf, &matches, 3);
        assert!((value - expect).abs() < 1e-10, "seed {seed}: {value} vs {expect}");
        assert!(value >= 0.0);
        let b = out.breakdown;
        assert!(b.num_negatives <= 3 * b.num_positives);
        let total_neg: usize = matches.iter().map(|m| m.num_priors() - m.num_positives()).sum();
        assert!(b.num_negatives <= total_neg);
    }
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let (loc, _, matches) = random_case(7, 2, 30, 3);
    let mut loc = loc;
    let mut conf = Tensor::zeros(vec![2, 30, 3]);
    for (b, m) in matches.iter().enumerate() {
        for i in 0..30 {
            conf.data_mut()[(b * 30 + i) * 3 + m.labels[i]] = 50.0;
            if m.labels[i] != 0 {
                loc.data_mut()[(b * 30 + i) * 4..(b * 30 + i + 1) * 4].copy_from_slice(&m.targets[i]);
            }
        }
    }
    let out = eval_loss(&loc, &conf, &matches);
    assert!(out.breakdown.total() < 1e-6);
    assert!(out.breakdown.num_positives > 0);
}

#[test]
fn smooth_l1_small_residual_branch() {
    let matches = vec![MatchResult { labels: vec![1], targets: vec![[0.0; 4]], matched_gt: vec![Some(0)] }];
    let loc = Tensor::new(vec![1, 1, 4], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
    let conf = Tensor::new(vec![1, 1, 2], vec![-50.0, 50.0]).unwrap();
    let out = eval_loss(&loc, &conf, &matches);
    assert!((out.breakdown.loc - 0.125).abs() < 1e-15);
    assert!(out.breakdown.conf < 1e-40);
    let loc = Tensor::new(vec![1, 1, 4], vec![0.5, -0.5, 2.0, 0.0]).unwrap();
    let out = eval_loss(&loc, &conf, &matches);
    assert!((out.breakdown.loc - (0.125 + 0.125 + 1.5)).abs() < 1e-15);
}

#[test]
fn no_positives_gives_zero_loss() {
    let matches = vec![MatchResult { labels: vec![0; 5], targets: vec![[0.0; 4]; 5], matched_gt: vec![None; 5] }];
    let out = eval_loss(&Tensor::zeros(vec![1, 5, 4]), &Tensor::full(vec![1, 5, 3], 1.0), &matches);
    assert_eq!(out.breakdown.total(), 0.0);
    assert_eq!(out.breakdown.num_negatives, 0);
}

#[test]
fn loss_rejects_disagreeing_shapes() {
    let (loc, conf, matches) = random_case(3, 2, 10, 3);
    let mut g = Graph::new();
    let head = HeadOutput { loc: g.variable(loc), conf: g.variable(conf) };
    assert!(multibox_loss(&mut g, &head, &matches[..1], 3).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (loc, conf, matches) = random_case(11, 2, 20, 3);
    let report = grad_check(
        &[("loc".to_string(), loc), ("conf".to_string(), conf)],
        |g, v| Ok(multibox_loss(g, &HeadOutput { loc: v[0], conf: v[1] }, &matches, 3)?.loss),
        &GradCheckOptions { tolerance: 1e-4, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}
